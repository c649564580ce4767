//! Collapsed Metropolis-within-Gibbs sampler over (structure, times,
//! hyperparameters), with internal locations marginalized by message passing.
//!
//! The structural move detaches a uniformly chosen subtree and regrows its
//! attachment with the generative walk. The walk density equals the prior's
//! conditional for single-leaf subtrees, so those prior terms cancel in the
//! Metropolis ratio; for wider subtrees the cancellation is only partial and
//! the exact ratio (prior times walk-density correction, plus the change in
//! the detach-choice count) is used.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::bp::{Evaluator, LeafMessage, LeafMessages};
use crate::data::{BinaryData, DataSet};
use crate::density::{structure_factor, times_factor};
use crate::divergence::j_factor;
use crate::error::{Error, Result};
use crate::generative::{sample_attachment, sample_structure, walk_log_density};
use crate::hyper::Hyperparams;
use crate::probit::log_phi;
use crate::slice::slice_sample;
use crate::tree::{Attachment, DetachRecord, NodeId, Tree};

/// Observed data driving the likelihood.
#[derive(Debug, Clone)]
pub enum Observations {
    Gaussian(DataSet),
    Probit(BinaryData),
    /// No data: the chain samples the prior. Used by correctness tests.
    None { n: usize, dim: usize },
}

impl Observations {
    pub fn n_rows(&self) -> usize {
        match self {
            Observations::Gaussian(d) => d.n_rows(),
            Observations::Probit(b) => b.n_rows(),
            Observations::None { n, .. } => *n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Observations::Gaussian(d) => d.dim(),
            Observations::Probit(b) => b.dim(),
            Observations::None { dim, .. } => *dim,
        }
    }
}

/// Sampler configuration.
#[derive(Debug, Clone)]
pub struct McmcConfig {
    pub sweeps: usize,
    pub burnin: usize,
    pub thin: usize,
    /// Structural proposals per sweep; defaults to the number of data points.
    pub moves_per_sweep: Option<usize>,
    pub update_c: bool,
    pub update_sigma2: bool,
    pub update_alpha_beta: bool,
    pub seed: u64,
    /// Recompute the cached marginal likelihood every this many sweeps.
    pub spot_check_every: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            sweeps: 1000,
            burnin: 0,
            thin: 1,
            moves_per_sweep: None,
            update_c: true,
            update_sigma2: true,
            update_alpha_beta: true,
            seed: 0,
            spot_check_every: 1000,
        }
    }
}

/// Current chain position plus its cached marginal likelihood.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub tree: Tree,
    pub hyper: Hyperparams,
    pub log_ml: f64,
    /// Latent leaf locations for the probit model; empty otherwise.
    pub latents: Option<DataSet>,
}

/// One thinned sample.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub sweep: usize,
    pub log_ml: f64,
    pub c: f64,
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tree: Tree,
}

/// Acceptance counters and consistency checks.
#[derive(Debug, Clone, Default)]
pub struct McmcStats {
    pub subtree_proposed: usize,
    pub subtree_accepted: usize,
    pub subtree_noop: usize,
    pub walk_failures: usize,
    pub spot_checks: usize,
    pub spot_check_max_err: f64,
}

impl McmcStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.subtree_proposed == 0 {
            0.0
        } else {
            self.subtree_accepted as f64 / self.subtree_proposed as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct McmcRun {
    pub records: Vec<SampleRecord>,
    pub stats: McmcStats,
    pub final_state: ChainState,
}

/// Leaf messages for the current state: data point masses for the Gaussian
/// model, latent point masses for probit, nothing for prior-only chains.
fn leaf_messages(obs: &Observations, state: &ChainState) -> LeafMessages {
    match obs {
        Observations::Gaussian(data) => LeafMessages::point_mass(data),
        Observations::Probit(_) => {
            LeafMessages::point_mass(state.latents.as_ref().expect("probit latents"))
        }
        Observations::None { n, dim } => LeafMessages::missing(*n, *dim),
    }
}

/// Marginal likelihood of the current state.
pub fn state_log_ml(obs: &Observations, state: &ChainState) -> Result<f64> {
    match obs {
        Observations::None { .. } => Ok(0.0),
        _ => {
            let lm = leaf_messages(obs, state);
            crate::bp::marginal_likelihood(&state.tree, state.hyper.sigma2, &lm)
        }
    }
}

fn log_structure_times(tree: &Tree, hyper: &Hyperparams) -> Result<f64> {
    Ok(structure_factor(tree, hyper.alpha, hyper.beta)? + times_factor(tree, hyper)?)
}

fn attachment_from_record(rec: &DetachRecord) -> Attachment {
    match *rec {
        DetachRecord::Kept { parent, .. } => Attachment::AtNode { node: parent },
        DetachRecord::Spliced {
            sibling,
            parent_time,
            ..
        } => Attachment::OnEdge {
            child: sibling,
            time: parent_time,
        },
        DetachRecord::RootChild => Attachment::FirstChild,
    }
}

/// One detach/regrow Metropolis step.
pub fn subtree_move<R: Rng + ?Sized>(
    state: &mut ChainState,
    obs: &Observations,
    stats: &mut McmcStats,
    rng: &mut R,
) -> Result<()> {
    let candidates: Vec<NodeId> = state
        .tree
        .node_ids()
        .into_iter()
        .filter(|&id| id != state.tree.root())
        .collect();
    if candidates.is_empty() {
        return Ok(());
    }
    stats.subtree_proposed += 1;
    let target = candidates[rng.gen_range(0..candidates.len())];
    if state.tree.node(state.tree.root()).children == [target] {
        // detaching the root's only child leaves nothing to walk on; the
        // proposal reproduces the same tree
        stats.subtree_noop += 1;
        stats.subtree_accepted += 1;
        return Ok(());
    }

    let t_sub = state.tree.node(target).time;
    let choices_old = candidates.len() as f64;
    let prior_old = log_structure_times(&state.tree, &state.hyper)?;

    let rec = state.tree.detach_subtree(target)?;
    let old_attachment = attachment_from_record(&rec);
    let walk_old = walk_log_density(&state.tree, &old_attachment, &state.hyper)?;

    let proposal = match sample_attachment(&state.tree, t_sub, &state.hyper, rng) {
        Ok(p) => p,
        Err(_) => {
            stats.walk_failures += 1;
            state.tree.restore_subtree(target, &rec)?;
            return Ok(());
        }
    };
    let walk_new = walk_log_density(&state.tree, &proposal, &state.hyper)?;
    state.tree.attach_subtree(target, &proposal)?;

    let choices_new = (state.tree.n_nodes() - 1) as f64;
    let prior_new = log_structure_times(&state.tree, &state.hyper)?;
    let ml_new = state_log_ml(obs, state)?;

    let log_ratio = (ml_new - state.log_ml) + (prior_new - prior_old)
        + (walk_old - walk_new)
        + (choices_old.ln() - choices_new.ln());
    if rng.gen::<f64>().ln() < log_ratio {
        state.log_ml = ml_new;
        stats.subtree_accepted += 1;
    } else {
        let undo = state.tree.detach_subtree(target)?;
        let _ = undo;
        state.tree.restore_subtree(target, &rec)?;
    }
    Ok(())
}

/// Gibbs draw of the smoothness parameter from its Gamma conditional.
pub fn gibbs_c<R: Rng + ?Sized>(state: &mut ChainState, rng: &mut R) -> Result<()> {
    let priors = state.hyper.priors;
    let internals = state.tree.internal_nodes();
    let mut rate = priors.c.rate;
    for &id in &internals {
        let counts = state.tree.child_counts(id);
        let j = j_factor(&counts, state.hyper.alpha, state.hyper.beta)?;
        rate -= j * (1.0 - state.tree.node(id).time).ln();
    }
    let shape = priors.c.shape + internals.len() as f64;
    let gamma = rand_distr::Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("gamma draw: {e}")))?;
    state.hyper.c = gamma.sample(rng).max(f64::MIN_POSITIVE);
    Ok(())
}

/// Gibbs draw of the diffusion variance: instantiate internal locations from
/// their posterior, then draw the precision from its conjugate Gamma.
pub fn gibbs_sigma2<R: Rng + ?Sized>(
    state: &mut ChainState,
    obs: &Observations,
    rng: &mut R,
) -> Result<()> {
    let priors = state.hyper.priors;
    let lm = leaf_messages(obs, state);
    let mut ev = Evaluator::new(&state.tree, state.hyper.sigma2, &lm)?;
    let locs = ev.sample_locations(rng);
    let slots = state
        .tree
        .node_ids()
        .iter()
        .map(|i| i.index())
        .max()
        .map_or(1, |m| m + 1);
    let mut by_slot: Vec<Option<&Vec<f64>>> = vec![None; slots];
    for (id, x) in &locs {
        by_slot[id.index()] = Some(x);
    }
    let dim = state.tree.dim() as f64;
    let mut shape = priors.precision.shape;
    let mut rate = priors.precision.rate;
    for id in state.tree.preorder() {
        let Some(parent) = state.tree.node(id).parent else {
            continue;
        };
        let dt = state.tree.node(id).time - state.tree.node(parent).time;
        if dt <= 0.0 {
            return Err(Error::DegenerateEdge(id));
        }
        let xc = by_slot[id.index()].expect("sampled");
        let xp = by_slot[parent.index()].expect("sampled");
        let sq: f64 = xc.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum();
        shape += dim / 2.0;
        rate += sq / (2.0 * dt);
    }
    let gamma = rand_distr::Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("gamma draw: {e}")))?;
    let precision: f64 = gamma.sample(rng);
    state.hyper.sigma2 = (1.0 / precision).max(f64::MIN_POSITIVE);
    // the marginal likelihood depends on sigma2
    state.log_ml = state_log_ml(obs, state)?;
    Ok(())
}

/// Slice-sample the branching hyperparameters on unconstrained scales
/// (log alpha, logit beta).
pub fn slice_alpha_beta<R: Rng + ?Sized>(state: &mut ChainState, rng: &mut R) -> Result<()> {
    let priors = state.hyper.priors;
    let tree = state.tree.clone();
    let c = state.hyper.c;

    let target = |alpha: f64, beta: f64| -> f64 {
        let hyper = Hyperparams {
            c,
            sigma2: 1.0,
            alpha,
            beta,
            priors,
        };
        let s = structure_factor(&tree, alpha, beta).unwrap_or(f64::NEG_INFINITY);
        let t = times_factor(&tree, &hyper).unwrap_or(f64::NEG_INFINITY);
        s + t
    };

    // alpha on the log scale
    let beta_now = state.hyper.beta;
    let u0 = state.hyper.alpha.max(1e-12).ln();
    let mut log_f_alpha = |u: f64| {
        let alpha = u.exp();
        if !alpha.is_finite() {
            return f64::NEG_INFINITY;
        }
        priors.alpha.log_pdf(alpha) + u + target(alpha, beta_now)
    };
    let u1 = slice_sample(u0, 1.0, &mut log_f_alpha, rng);
    state.hyper.alpha = u1.exp();

    // beta on the logit scale
    let alpha_now = state.hyper.alpha;
    let b0 = state.hyper.beta.clamp(1e-9, 1.0 - 1e-9);
    let v0 = (b0 / (1.0 - b0)).ln();
    let mut log_f_beta = |v: f64| {
        let beta = 1.0 / (1.0 + (-v).exp());
        if !(beta > 0.0 && beta < 1.0) {
            return f64::NEG_INFINITY;
        }
        priors.beta.log_pdf(beta) + beta.ln() + (1.0 - beta).ln() + target(alpha_now, beta)
    };
    let v1 = slice_sample(v0, 1.0, &mut log_f_beta, rng);
    state.hyper.beta = 1.0 / (1.0 + (-v1).exp());
    Ok(())
}

/// Refresh the probit latent locations: each leaf latent is slice-sampled
/// from its leave-one-out conditional times the probit link.
pub fn update_probit_latents<R: Rng + ?Sized>(
    state: &mut ChainState,
    y: &BinaryData,
    rng: &mut R,
) -> Result<()> {
    let n = y.n_rows();
    let dim = y.dim();
    for i in 0..n {
        let leaf = state.tree.leaf_by_index(i)?;
        // cavity: everything except this leaf's observation
        let mut lm = LeafMessages::point_mass(state.latents.as_ref().unwrap());
        lm.set(i, LeafMessage::Missing);
        let mut ev = Evaluator::new(&state.tree, state.hyper.sigma2, &lm)?;
        let cavity = ev.marginal(leaf);
        let latents = state.latents.as_mut().unwrap();
        for d in 0..dim {
            let (m, v) = (cavity[d].mean, cavity[d].var);
            let z = match y.get(i, d) {
                Some(obs) => {
                    let sign = if obs { 1.0 } else { -1.0 };
                    let mut log_f =
                        |x: f64| -0.5 * (x - m) * (x - m) / v + log_phi(sign * x);
                    slice_sample(latents.row(i)[d], v.sqrt(), &mut log_f, rng)
                }
                None => m + v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal),
            };
            latents.row_mut(i)[d] = z;
        }
    }
    state.log_ml = state_log_ml(&Observations::Probit(y.clone()), state)?;
    Ok(())
}

/// Run the collapsed sampler.
pub fn run_mcmc(
    obs: &Observations,
    hyper0: &Hyperparams,
    init: Option<Tree>,
    config: &McmcConfig,
) -> Result<McmcRun> {
    let n = obs.n_rows();
    let dim = obs.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("no data rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tree = match init {
        Some(t) => {
            let problems = t.validate();
            if !problems.is_empty() {
                return Err(Error::InvalidTree(problems.join("; ")));
            }
            if t.n_leaves() != n {
                return Err(Error::InvalidArgument(format!(
                    "initial tree has {} leaves for {} data rows",
                    t.n_leaves(),
                    n
                )));
            }
            t
        }
        None => sample_structure(n, dim, hyper0, &mut rng)?,
    };
    let latents = match obs {
        Observations::Probit(y) => {
            let mut vals = Vec::with_capacity(n * dim);
            for i in 0..n {
                for d in 0..dim {
                    vals.push(match y.get(i, d) {
                        Some(true) => 0.5,
                        Some(false) => -0.5,
                        None => 0.0,
                    });
                }
            }
            Some(DataSet::new(n, dim, vals)?)
        }
        _ => None,
    };
    let mut state = ChainState {
        tree,
        hyper: hyper0.clone(),
        log_ml: 0.0,
        latents,
    };
    state.log_ml = state_log_ml(obs, &state)?;

    let moves = config.moves_per_sweep.unwrap_or(n).max(1);
    let mut stats = McmcStats::default();
    let mut records = Vec::new();
    for sweep in 0..config.sweeps {
        for _ in 0..moves {
            subtree_move(&mut state, obs, &mut stats, &mut rng)?;
        }
        if let Observations::Probit(y) = obs {
            update_probit_latents(&mut state, y, &mut rng)?;
        }
        if config.update_c {
            gibbs_c(&mut state, &mut rng)?;
        }
        if config.update_sigma2 && !matches!(obs, Observations::None { .. }) {
            gibbs_sigma2(&mut state, obs, &mut rng)?;
        }
        if config.update_alpha_beta {
            slice_alpha_beta(&mut state, &mut rng)?;
        }
        if config.spot_check_every > 0 && sweep % config.spot_check_every == 0 {
            let fresh = state_log_ml(obs, &state)?;
            let err = (fresh - state.log_ml).abs();
            stats.spot_checks += 1;
            stats.spot_check_max_err = stats.spot_check_max_err.max(err);
            debug_assert!(err < 1e-6, "cached likelihood drifted by {err}");
            state.log_ml = fresh;
        }
        if sweep >= config.burnin && (sweep - config.burnin) % config.thin.max(1) == 0 {
            records.push(SampleRecord {
                sweep,
                log_ml: state.log_ml,
                c: state.hyper.c,
                sigma2: state.hyper.sigma2,
                alpha: state.hyper.alpha,
                beta: state.hyper.beta,
                tree: state.tree.clone(),
            });
        }
    }
    Ok(McmcRun {
        records,
        stats,
        final_state: state,
    })
}
