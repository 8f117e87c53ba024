use std::collections::BTreeSet;
use std::io::{self, Write};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{RunConfig, Variant};
use super::metrics::MetricsRow;
use super::trainer::{train, Trainer};
use super::HarnessError;
use crate::causal_graphs::{
    dag_to_mag, order_compatible, sample_subenv_family, union_mags, verify_mag, worked_example_family, GraphError,
    MixedGraph, LATENT,
};
use crate::corep::{dual_forward, losses, vae_heads, CorepConfig, CorepModel, LossWeights, ModelBindings};
use crate::numerics::{finite_difference_check, Bindings, NumericsError, ParamGroup, Tape, Tensor, Var};
use crate::policy::{policy_forward, ppo_loss, PolicyConfig, PolicyParams, PpoBatch};

/// Mean of `return_mean` over the last tenth of the rows (at least one).
pub fn final_return(rows: &[MetricsRow]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let tail = rows.len().div_ceil(10);
    let slice = &rows[rows.len() - tail..];
    Some(slice.iter().map(|r| r.return_mean).sum::<f64>() / tail as f64)
}

fn run_final(cfg: &RunConfig) -> Result<f64, HarnessError> {
    let mut tr = Trainer::new(cfg.clone())?;
    let rows = train(&mut tr, io::sink(), None)?;
    final_return(&rows).ok_or_else(|| HarnessError::Config("total_steps must be > 0 for comparisons".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_return: f64,
    /// `final_return / final_return(full)`. Returns are costs here, so a
    /// ratio above 1 is worse than the full model.
    pub normalized: f64,
}

/// Runs every variant with the same seed and normalizes to the full model.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>, HarnessError> {
    if variants.is_empty() {
        return Err(HarnessError::Config("no variants given".into()));
    }
    let with = |v: Variant| RunConfig { variant: v, ..cfg.clone() };
    let full = run_final(&with(Variant::Full))?;
    variants
        .iter()
        .map(|&v| {
            let r = if v == Variant::Full { full } else { run_final(&with(v))? };
            Ok(AblationRow { variant: v, final_return: r, normalized: r / full })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub degree: f64,
    pub final_return: f64,
    /// `final_return` divided by the degree-1.0 return.
    pub normalized: f64,
}

/// Runs the configured variant at each degree; normalizes to degree 1.0.
pub fn degree_sweep(cfg: &RunConfig, degrees: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if degrees.is_empty() {
        return Err(HarnessError::Config("no degrees given".into()));
    }
    if let Some(d) = degrees.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(HarnessError::Config(format!("degree must be finite and >= 0, got {d}")));
    }
    let at = |d: f64| {
        let mut c = cfg.clone();
        c.env.degree = d;
        c
    };
    let base = run_final(&at(1.0))?;
    degrees
        .iter()
        .map(|&d| {
            let r = if d == 1.0 { base } else { run_final(&at(d))? };
            Ok(SweepRow { degree: d, final_return: r, normalized: r / base })
        })
        .collect()
}

/// Head-averaged final-layer attention of both branches at `state`.
pub fn export_graph(checkpoint: &str, state: &[f64]) -> Result<(Tensor, Option<Tensor>), HarnessError> {
    let tr = Trainer::from_checkpoint::<&str>(checkpoint, &[])?;
    let model = tr
        .model()
        .filter(|m| !m.gat.core.is_empty())
        .ok_or_else(|| HarnessError::Invalid(format!("variant {} has no attention branches", tr.config().variant)))?;
    if state.len() != model.state_dim {
        return Err(HarnessError::Invalid(format!(
            "state has {} entries, the checkpoint expects {}",
            state.len(),
            model.state_dim
        )));
    }
    model.adjacencies(state).map_err(super::in_component("representation"))
}

/// Row-major CSV with 9 significant digits.
pub fn write_matrix_csv<W: Write>(mut out: W, m: &Tensor) -> io::Result<()> {
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphVerifyReport {
    pub worked_example: bool,
    pub trials: usize,
    pub mag_ok: usize,
    pub order_ok: usize,
    pub failures: Vec<String>,
}

impl GraphVerifyReport {
    pub fn passed(&self) -> bool {
        self.worked_example && self.mag_ok == self.trials && self.order_ok == self.trials
    }
}

fn edge_set(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn worked_example_ok() -> Result<bool, GraphError> {
    let shared = [("a", "s'"), ("a", "h1'"), ("s", "s'"), ("h2", "h2'"), ("a'", "r'"), ("s'", "r'")];
    let first_only = [("s", "h2'"), ("h1", "h2'"), ("h1'", "r'")];
    let second_only = [("s", "h1'"), ("h1", "h1'"), ("h1", "h2'"), ("h2'", "r'")];
    let bidirected = edge_set(&[("h1", "h2"), ("h1", "s"), ("h2", "s")]);

    let family = worked_example_family();
    let mags: Vec<MixedGraph> =
        family.dags()?.iter().map(|d| dag_to_mag(d, LATENT)).collect::<Result<_, _>>()?;
    let mut ok = true;
    for (mag, extra) in mags.iter().zip([&first_only[..], &second_only[..]]) {
        let mut want = edge_set(&shared);
        want.extend(edge_set(extra));
        ok &= mag.directed_edges() == want && mag.bidirected_edges() == bidirected;
    }
    let union = union_mags(&mags)?;
    let mut want = edge_set(&shared);
    want.extend(edge_set(&first_only));
    want.extend(edge_set(&second_only));
    ok &= union.directed_edges() == want && union.bidirected_edges() == bidirected;
    ok &= verify_mag(&union)?.is_mag() && order_compatible(&family.layered_order(), &mags);
    Ok(ok)
}

/// Worked-example edge sets plus `trials` sampled families with
/// `d_s + d_h <= 8`, up to 4 environments and edge probability in
/// {0.2, 0.5, 0.8}: each union must be a MAG and the layered order must be
/// compatible with every per-environment MAG.
pub fn graph_verify(trials: usize, seed: u64) -> Result<GraphVerifyReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GraphVerifyReport {
        worked_example: worked_example_ok()?,
        trials,
        mag_ok: 0,
        order_ok: 0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let d_s = rng.random_range(1..=7);
        let d_h = rng.random_range(1..=8 - d_s);
        let k = rng.random_range(1..=4);
        let p = [0.2, 0.5, 0.8][trial % 3];
        let (family, dags) = sample_subenv_family(&mut rng, d_s, d_h, k, p)?;
        let mags: Vec<MixedGraph> = dags.iter().map(|d| dag_to_mag(d, LATENT)).collect::<Result<_, _>>()?;
        let label = format!("trial {trial} (d_s={d_s}, d_h={d_h}, k={k}, p={p})");
        match union_mags(&mags).and_then(|u| verify_mag(&u)) {
            Ok(r) if r.is_mag() => report.mag_ok += 1,
            Ok(r) => report.failures.push(format!("{label}: not a MAG ({r:?})")),
            Err(e) => report.failures.push(format!("{label}: {e}")),
        }
        if order_compatible(&family.layered_order(), &mags) {
            report.order_ok += 1;
        } else {
            report.failures.push(format!("{label}: order incompatible"));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheckReport {
    /// Worst relative error per check.
    pub results: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|(_, e)| *e <= self.tolerance)
    }
}

type Expr = Box<dyn Fn(&mut Tape, &Bindings) -> Result<Var, NumericsError>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `[lo, hi]` with random sign, keeping clear of zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate reaches the checked gradient.
fn weighted(weights: Tensor, op: impl Fn(&mut Tape, &Bindings) -> Result<Var, NumericsError> + 'static) -> Expr {
    Box::new(move |t, b| {
        let y = op(t, b)?;
        let w = t.constant(weights.clone());
        let p = t.mul(y, w)?;
        t.sum(p)
    })
}

fn group(entries: Vec<(&str, Tensor)>) -> ParamGroup {
    let mut g = ParamGroup::new();
    for (n, v) in entries {
        g.set(n, v, true);
    }
    g
}

/// One random instance of each differentiable primitive.
fn op_instances(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ParamGroup, Expr)> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.5, 1.5);
    let mut out: Vec<(&'static str, ParamGroup, Expr)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $out_shape:expr, $body:expr) => {{
            let inputs = $inputs;
            let w = r(rng, &$out_shape);
            out.push(($name, inputs, weighted(w, $body)));
        }};
    }
    let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    case!("matmul", group(vec![("a", r(rng, &[m, k])), ("b", r(rng, &[k, n]))]), [m, n], |t: &mut Tape, b: &Bindings| {
        t.matmul(b.var("a")?, b.var("b")?)
    });
    case!(
        "batch_matmul",
        group(vec![("a", r(rng, &[2, m, k])), ("b", r(rng, &[2, k, n]))]),
        [2, m, n],
        |t: &mut Tape, b: &Bindings| t.batch_matmul(b.var("a")?, b.var("b")?)
    );
    case!("transpose", group(vec![("x", r(rng, &[2, m, n]))]), [2, n, m], |t: &mut Tape, b: &Bindings| t
        .transpose(b.var("x")?));
    let s = [m, n];
    let two = || -> fn(&mut ChaCha8Rng, &[usize]) -> Tensor { |rng, s| rand_tensor(rng, s, -1.5, 1.5) };
    let pair = |rng: &mut ChaCha8Rng| group(vec![("x", two()(rng, &s)), ("y", two()(rng, &s))]);
    case!("add", pair(rng), s, |t: &mut Tape, b: &Bindings| t.add(b.var("x")?, b.var("y")?));
    case!("sub", pair(rng), s, |t: &mut Tape, b: &Bindings| t.sub(b.var("x")?, b.var("y")?));
    case!("mul", pair(rng), s, |t: &mut Tape, b: &Bindings| t.mul(b.var("x")?, b.var("y")?));
    case!(
        "scalar_broadcast",
        group(vec![("x", r(rng, &s)), ("c", r(rng, &[]))]),
        s,
        |t: &mut Tape, b: &Bindings| t.mul(b.var("x")?, b.var("c")?)
    );
    let one = |rng: &mut ChaCha8Rng| group(vec![("x", two()(rng, &s))]);
    case!("scale", one(rng), s, |t: &mut Tape, b: &Bindings| t.scale(b.var("x")?, -0.7));
    case!("shift", one(rng), s, |t: &mut Tape, b: &Bindings| t.shift(b.var("x")?, 0.3));
    case!("neg", one(rng), s, |t: &mut Tape, b: &Bindings| t.neg(b.var("x")?));
    case!("square", one(rng), s, |t: &mut Tape, b: &Bindings| t.square(b.var("x")?));
    case!("exp", one(rng), s, |t: &mut Tape, b: &Bindings| t.exp(b.var("x")?));
    case!("log", group(vec![("x", rand_tensor(rng, &s, 0.2, 3.0))]), s, |t: &mut Tape, b: &Bindings| t
        .log(b.var("x")?));
    case!("tanh", one(rng), s, |t: &mut Tape, b: &Bindings| t.tanh(b.var("x")?));
    let kinked = |rng: &mut ChaCha8Rng| group(vec![("x", away_from_zero(rng, &s, 0.05, 1.5))]);
    case!("relu", kinked(rng), s, |t: &mut Tape, b: &Bindings| t.relu(b.var("x")?));
    case!("elu", kinked(rng), s, |t: &mut Tape, b: &Bindings| t.elu(b.var("x")?));
    case!("leaky_relu", kinked(rng), s, |t: &mut Tape, b: &Bindings| t.leaky_relu(b.var("x")?, 0.2));
    case!("clamp", kinked(rng), s, |t: &mut Tape, b: &Bindings| {
        let x = b.var("x")?;
        let y = t.scale(x, 2.0)?;
        // Entries lie in +-[0.1, 3]; bounds at +-1.05 sit between grid points.
        t.clamp(y, -1.05, 1.05)
    });
    {
        let x = r(rng, &s);
        let mut y = r(rng, &s);
        for (yi, xi) in y.data_mut().iter_mut().zip(x.data()) {
            if (*yi - xi).abs() < 0.05 {
                *yi = xi + 0.1;
            }
        }
        case!("minimum", group(vec![("x", x), ("y", y)]), s, |t: &mut Tape, b: &Bindings| t
            .minimum(b.var("x")?, b.var("y")?));
    }
    let c = n + 1;
    case!("row_softmax", group(vec![("x", r(rng, &[2, m, c]))]), [2, m, c], |t: &mut Tape, b: &Bindings| t
        .row_softmax(b.var("x")?));
    {
        let mask: Rc<[bool]> = (0..m * c).map(|i| i % c != (i / c) % c).collect();
        case!("masked_row_softmax", group(vec![("x", r(rng, &[m, c]))]), [m, c], move |t: &mut Tape, b: &Bindings| t
            .masked_row_softmax(b.var("x")?, mask.clone()));
    }
    case!(
        "concat_last",
        group(vec![("x", r(rng, &[m, k])), ("y", r(rng, &[m, n]))]),
        [m, k + n],
        |t: &mut Tape, b: &Bindings| t.concat_last(&[b.var("x")?, b.var("y")?])
    );
    case!("reshape", group(vec![("x", r(rng, &[m, k, n]))]), [m, k * n], move |t: &mut Tape, b: &Bindings| t
        .reshape(b.var("x")?, &[m, k * n]));
    case!("tile_last", group(vec![("x", r(rng, &[m, 1]))]), [m, 3], |t: &mut Tape, b: &Bindings| t
        .tile_last(b.var("x")?, 3));
    case!("expand_leading", group(vec![("x", r(rng, &[1, k]))]), [m, k], move |t: &mut Tape, b: &Bindings| t
        .expand_leading(b.var("x")?, m));
    case!("sum", one(rng), [], |t: &mut Tape, b: &Bindings| t.sum(b.var("x")?));
    case!("mean", one(rng), [], |t: &mut Tape, b: &Bindings| t.mean(b.var("x")?));
    case!("sum_last", group(vec![("x", r(rng, &[2, m, n]))]), [2, m, 1], |t: &mut Tape, b: &Bindings| t
        .sum_last(b.var("x")?));
    case!("l1", kinked(rng), [], |t: &mut Tape, b: &Bindings| t.l1(b.var("x")?));
    case!("sq_l2", one(rng), [], |t: &mut Tape, b: &Bindings| t.sq_l2(b.var("x")?));
    case!("norm_last", group(vec![("x", away_from_zero(rng, &[m, n], 0.2, 1.5))]), [m, 1], |t: &mut Tape, b: &Bindings| t
        .norm_last(b.var("x")?));
    case!(
        "gaussian_log_density",
        group(vec![("x", r(rng, &s)), ("mean", r(rng, &s)), ("log_std", r(rng, &s))]),
        [m, 1],
        |t: &mut Tape, b: &Bindings| t.gaussian_log_density(b.var("x")?, b.var("mean")?, b.var("log_std")?)
    );
    case!(
        "reparameterize",
        group(vec![("mean", r(rng, &s)), ("log_std", r(rng, &s)), ("noise", r(rng, &s))]),
        s,
        |t: &mut Tape, b: &Bindings| t.reparameterize(b.var("mean")?, b.var("log_std")?, b.var("noise")?)
    );
    out
}

/// Worst finite-difference error of each primitive over `trials` random
/// instances.
pub fn op_gradient_errors(trials: usize, seed: u64) -> Result<Vec<(String, f64)>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for _ in 0..trials {
        for (name, inputs, expr) in op_instances(&mut rng) {
            let e = finite_difference_check(&expr, &inputs, 1e-6)?;
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some((_, w)) => *w = w.max(e),
                None => worst.push((name.to_string(), e)),
            }
        }
    }
    Ok(worst)
}

fn prefixed(out: &mut ParamGroup, prefix: &str, g: &ParamGroup) {
    for (name, e) in g.iter() {
        out.set(&format!("{prefix}.{name}"), e.tensor.clone(), true);
    }
}

fn model_bindings(b: &Bindings) -> ModelBindings {
    ModelBindings {
        featurizer: b.scoped("featurizer"),
        core: b.scoped("core"),
        general: b.scoped("general"),
        encoder: b.scoped("encoder"),
        decoder: b.scoped("decoder"),
    }
}

/// Finite-difference error of the complete training loss (policy loss plus
/// weighted guide, MAG, sparsity and VAE terms) on a one-state batch with
/// `N = 3` and all graph and latent widths 2.
pub fn composite_loss_error(seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CorepConfig {
        nodes: 3,
        node_dim: 2,
        graph_dim: 2,
        latent_dim: 2,
        featurizer_hidden: 5,
        encoder_hidden: 6,
        decoder_hidden: 4,
        ..CorepConfig::default()
    };
    let (d_s, d_a) = (3, 2);
    let model = CorepModel::init(cfg.clone(), d_s, &mut rng).map_err(super::in_component("representation"))?;
    let pcfg = PolicyConfig { hidden: 5, ..PolicyConfig::default() };
    let policy = PolicyParams::init(d_s + cfg.latent_dim, d_a, &pcfg, &mut rng);
    let mut inputs = ParamGroup::new();
    for (name, g) in model.groups() {
        prefixed(&mut inputs, name, g);
    }
    prefixed(&mut inputs, "actor", &policy.actor);
    prefixed(&mut inputs, "critic", &policy.critic);
    // Zero biases behind a dead ReLU put pre-activations exactly on the kink,
    // where central differences are one-sided. Move every bias off zero.
    let biases: Vec<String> = inputs
        .iter()
        .filter(|(n, _)| n.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('b')))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &biases {
        let shape = inputs.get(name).map_err(super::numerics_in("selfcheck"))?.shape().to_vec();
        inputs.set(name, rand_tensor(&mut rng, &shape, -0.5, 0.5), true);
    }
    // The final actor layer starts near zero; widen it so the policy term
    // has a gradient of ordinary size.
    for name in ["actor.w2"] {
        let shape = inputs.get(name).map_err(super::numerics_in("selfcheck"))?.shape().to_vec();
        inputs.set(name, rand_tensor(&mut rng, &shape, -0.5, 0.5), true);
    }

    let state = rand_tensor(&mut rng, &[1, d_s], -1.0, 1.0);
    let noise = Tensor::matrix(1, cfg.latent_dim, (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect())
        .map_err(super::numerics_in("selfcheck"))?;
    let actions = rand_tensor(&mut rng, &[1, d_a], -1.0, 1.0);
    let weights = LossWeights::from_config(&cfg);

    let build = {
        let cfg = cfg.clone();
        move |t: &mut Tape, b: &Bindings, batch: &PpoBatch| -> Result<(Var, Var), NumericsError> {
            let mb = model_bindings(b);
            let wrap = |e: crate::corep::CorepError| NumericsError::Invalid { op: "composite", msg: e.to_string() };
            let s = t.constant(state.clone());
            let out = dual_forward(t, s, &mb, &cfg).map_err(wrap)?;
            let nz = t.constant(noise.clone());
            let vae = vae_heads(t, out.encoder_input, s, nz, &mb, true).map_err(wrap)?;
            let input = t.concat_last(&[s, vae.h])?;
            let actor = b.scoped("actor");
            let critic = b.scoped("critic");
            let heads = policy_forward(t, input, &actor, &critic)?;
            let a = t.constant(batch.actions.clone());
            let logp = t.gaussian_log_density(a, heads.mean, heads.log_std)?;
            let terms = ppo_loss(t, input, batch, &actor, &critic, &pcfg)?;
            let lt = losses(t, out.a_core, out.a_general, Some((vae.recon, vae.kl)), terms.loss, &weights)
                .map_err(wrap)?;
            Ok((lt.total, logp))
        }
    };
    let mut batch = PpoBatch {
        actions,
        old_log_probs: Tensor::zeros(&[1, 1]),
        advantages: Tensor::full(&[1, 1], 0.8),
        returns: Tensor::full(&[1, 1], -0.4),
    };
    // Put the probability ratio strictly inside the clip range.
    let mut t = Tape::new();
    let b = Bindings::bind(&mut t, &inputs);
    let (_, logp) = build(&mut t, &b, &batch).map_err(super::numerics_in("selfcheck"))?;
    batch.old_log_probs = Tensor::full(&[1, 1], t.value(logp).data()[0] - 0.03);

    finite_difference_check(move |t, b| Ok(build(t, b, &batch)?.0), &inputs, 1e-6)
        .map_err(super::numerics_in("selfcheck"))
}

/// Gradient suites: every primitive over `trials` instances and the
/// composite loss.
pub fn selfcheck(trials: usize, seed: u64) -> Result<SelfCheckReport, HarnessError> {
    let mut results = op_gradient_errors(trials, seed).map_err(super::numerics_in("selfcheck"))?;
    results.push(("composite_loss".into(), composite_loss_error(seed)?));
    Ok(SelfCheckReport { results, tolerance: 1e-4 })
}
